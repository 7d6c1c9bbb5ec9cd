//! Cross-attention interaction between geometric and photometric features
//! and the three-way live / normal-movement spoof / abnormal-movement spoof
//! classifier.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{attention_forward, Tape, Var};
use crate::checkpoint::{Checkpoint, TensorRecord};
use crate::error::{Error, Result};
use crate::gradcheck::HasParams;
use crate::kernels::softmax;
use crate::landmarks::{LandmarkSequence, MovementClassMap};
use crate::metrics::auc_scores;
use crate::optim::{sgd_step, ParamSet, Sgd};
use crate::stgcn::{prepare_eval_batch, Mode, StgcnModel};
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_KIND: &str = "fusion";

/// Tolerance between a feature vector and the mean of its frame rows.
pub const FRAME_MEAN_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhotometricFeature {
    pub id: String,
    pub feature: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames: Option<Vec<Vec<f64>>>,
}

impl PhotometricFeature {
    pub fn dim(&self) -> usize {
        self.feature.len()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |message: String| Error::Record {
            id: self.id.clone(),
            message,
        };
        if self.feature.is_empty() {
            return Err(err("empty feature vector".into()));
        }
        if self.feature.iter().any(|v| !v.is_finite()) {
            return Err(err("non-finite feature value".into()));
        }
        if let Some(rows) = &self.frames {
            if rows.is_empty() {
                return Err(err("`frames` is present but empty".into()));
            }
            if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != self.dim()) {
                return Err(err(format!(
                    "frame row {i} has {} values, feature has {}",
                    r.len(),
                    self.dim()
                )));
            }
            if rows.iter().flatten().any(|v| !v.is_finite()) {
                return Err(err("non-finite frame value".into()));
            }
            let inv = 1.0 / rows.len() as f64;
            for j in 0..self.dim() {
                let mean = rows.iter().map(|r| r[j]).sum::<f64>() * inv;
                if (mean - self.feature[j]).abs() > FRAME_MEAN_TOL {
                    return Err(err(format!(
                        "frame mean {mean} differs from feature value {} at index {j}",
                        self.feature[j]
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Reads `{id, feature, frames?}` lines into a map keyed by id.
pub fn load_photometric_features(path: impl AsRef<Path>) -> Result<BTreeMap<String, PhotometricFeature>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    let mut dim = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PhotometricFeature = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        rec.validate()?;
        let expected = *dim.get_or_insert(rec.dim());
        if expected != rec.dim() {
            return Err(Error::Record {
                message: format!("feature has {} values, earlier records have {expected}", rec.dim()),
                id: rec.id,
            });
        }
        if out.contains_key(&rec.id) {
            return Err(Error::Record {
                id: rec.id,
                message: "duplicate feature id".into(),
            });
        }
        out.insert(rec.id.clone(), rec);
    }
    Ok(out)
}

pub fn write_photometric_features(path: impl AsRef<Path>, features: &[PhotometricFeature]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for f in features {
        serde_json::to_writer(&mut w, f)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `softmax(Q Kᵀ / √d) V` for `q[m, d]`, `k[n, d]`, `v[n, d]`; also returns
/// the `[m, n]` weights.
pub fn cross_attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    if q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || k.shape() != v.shape() || q.shape()[1] != k.shape()[1] {
        return Err(Error::Shape(format!(
            "cross_attention: q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let (m, d, n) = (q.shape()[0], q.shape()[1], k.shape()[0]);
    let (out, w) = attention_forward(q.data(), k.data(), v.data(), 1, m, n, d);
    Ok((Tensor::new(vec![m, d], out)?, Tensor::new(vec![m, n], w)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenMode {
    /// One vector per modality; attention over a single key is the identity.
    Single,
    /// Per-time geometric tokens and per-frame photometric tokens.
    Multi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub attention_dim: usize,
    pub tokens: TokenMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs without dev-accuracy improvement before stopping.
    pub patience: usize,
    /// Standardize each token dimension with training-split statistics.
    pub standardize: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            attention_dim: 256,
            tokens: TokenMode::Single,
            epochs: 200,
            batch_size: 64,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            patience: 20,
            standardize: true,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.attention_dim == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "attention_dim, epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Token sets for one sample: `geometric[m, d_g]`, `photometric[n, d_p]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionInput<T> {
    pub geometric: Tensor<T>,
    pub photometric: Tensor<T>,
}

/// Tape handles of one fusion forward.
pub struct FusionVars {
    pub f_gp: Var,
    pub f_pg: Var,
    pub logits: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionModel<T> {
    geometric_dim: usize,
    photometric_dim: usize,
    config: FusionConfig,
    params: ParamSet<T>,
    scaling: Option<TokenScaling<T>>,
}

/// Per-dimension `(x - mean) * scale` applied to input tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenScaling<T> {
    pub geometric_mean: Vec<T>,
    pub geometric_scale: Vec<T>,
    pub photometric_mean: Vec<T>,
    pub photometric_scale: Vec<T>,
}

const SCALING_STATE: [&str; 4] = [
    "geometric_mean",
    "geometric_scale",
    "photometric_mean",
    "photometric_scale",
];

fn column_stats<T: Scalar>(rows: &[&Tensor<T>], d: usize) -> (Vec<T>, Vec<T>) {
    let mut sum = vec![0.0f64; d];
    let mut sq = vec![0.0f64; d];
    let mut n = 0usize;
    for t in rows {
        for row in t.data().chunks(d) {
            for (j, v) in row.iter().enumerate() {
                let v = v.to_f64().unwrap_or(0.0);
                sum[j] += v;
                sq[j] += v * v;
            }
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let scale = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| T::of(1.0 / (q / n - m * m).max(0.0).sqrt().max(1e-6)))
        .collect();
    (mean.into_iter().map(T::of).collect(), scale)
}

impl<T: Scalar> TokenScaling<T> {
    pub fn fit(inputs: &[FusionInput<T>]) -> Result<Self> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot fit scaling on no inputs".into()))?;
        let (dg, dp) = (first.geometric.last_dim(), first.photometric.last_dim());
        let (geometric_mean, geometric_scale) =
            column_stats(&inputs.iter().map(|x| &x.geometric).collect::<Vec<_>>(), dg);
        let (photometric_mean, photometric_scale) =
            column_stats(&inputs.iter().map(|x| &x.photometric).collect::<Vec<_>>(), dp);
        Ok(Self {
            geometric_mean,
            geometric_scale,
            photometric_mean,
            photometric_scale,
        })
    }

    fn apply(data: &mut [T], mean: &[T], scale: &[T]) {
        for row in data.chunks_mut(mean.len()) {
            for ((v, &m), &c) in row.iter_mut().zip(mean).zip(scale) {
                *v = (*v - m) * c;
            }
        }
    }

    fn parts(&self) -> [&Vec<T>; 4] {
        [
            &self.geometric_mean,
            &self.geometric_scale,
            &self.photometric_mean,
            &self.photometric_scale,
        ]
    }
}

const PROJECTIONS: [(&str, bool); 6] = [
    ("wq_g", true),
    ("wk_g", true),
    ("wv_g", true),
    ("wq_p", false),
    ("wk_p", false),
    ("wv_p", false),
];

impl<T: Scalar> FusionModel<T> {
    pub fn new<R: Rng + ?Sized>(
        geometric_dim: usize,
        photometric_dim: usize,
        config: FusionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if geometric_dim == 0 || photometric_dim == 0 {
            return Err(Error::InvalidArgument("feature dimensions must be positive".into()));
        }
        let d_a = config.attention_dim;
        let mut params = ParamSet::new();
        let init = |rows: usize, cols: usize, rng: &mut R| {
            let dist = Normal::new(0.0, (1.0 / rows as f64).sqrt()).expect("positive std");
            let data = (0..rows * cols).map(|_| T::of(dist.sample(rng))).collect();
            Tensor::new(vec![rows, cols], data)
        };
        for (name, geometric) in PROJECTIONS {
            let rows = if geometric { geometric_dim } else { photometric_dim };
            params.insert(name, init(rows, d_a, rng)?)?;
        }
        params.insert("cls.weight", init(2 * d_a, 3, rng)?)?;
        params.insert("cls.bias", Tensor::zeros(&[3]))?;
        Ok(Self {
            geometric_dim,
            photometric_dim,
            config,
            params,
            scaling: None,
        })
    }

    pub fn scaling(&self) -> Option<&TokenScaling<T>> {
        self.scaling.as_ref()
    }

    pub fn set_scaling(&mut self, scaling: Option<TokenScaling<T>>) -> Result<()> {
        if let Some(sc) = &scaling {
            let (dg, dp) = (self.geometric_dim, self.photometric_dim);
            if sc.geometric_mean.len() != dg
                || sc.geometric_scale.len() != dg
                || sc.photometric_mean.len() != dp
                || sc.photometric_scale.len() != dp
            {
                return Err(Error::Shape("token scaling does not match feature dimensions".into()));
            }
        }
        self.scaling = scaling;
        Ok(())
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.geometric_dim, self.photometric_dim, self.config.attention_dim)
    }

    fn project(&self, tape: &mut Tape<T>, tokens: Var, name: &str) -> Result<Var> {
        let shape = tape.value(tokens).shape().to_vec();
        let (b, m, d) = (shape[0], shape[1], shape[2]);
        let flat = tape.reshape(tokens, &[b * m, d])?;
        let w = tape.param(&self.params, name)?;
        let out = tape.matmul(flat, w)?;
        tape.reshape(out, &[b, m, self.config.attention_dim])
    }

    /// Batched forward: `geometric[B, m, d_g]`, `photometric[B, n, d_p]`.
    pub fn forward_on_tape(&self, tape: &mut Tape<T>, geometric: Var, photometric: Var) -> Result<FusionVars> {
        let (gs, ps) = (tape.value(geometric).shape().to_vec(), tape.value(photometric).shape().to_vec());
        if gs.len() != 3 || ps.len() != 3 || gs[0] != ps[0] || gs[2] != self.geometric_dim || ps[2] != self.photometric_dim {
            return Err(Error::Shape(format!(
                "fusion expects [B, m, {}] and [B, n, {}], got {gs:?} and {ps:?}",
                self.geometric_dim, self.photometric_dim
            )));
        }
        let qg = self.project(tape, geometric, "wq_g")?;
        let kg = self.project(tape, geometric, "wk_g")?;
        let vg = self.project(tape, geometric, "wv_g")?;
        let qp = self.project(tape, photometric, "wq_p")?;
        let kp = self.project(tape, photometric, "wk_p")?;
        let vp = self.project(tape, photometric, "wv_p")?;
        let f_gp = tape.attention(qg, kp, vp)?;
        let f_pg = tape.attention(qp, kg, vg)?;
        let pooled_gp = tape.mean_pool(f_gp)?;
        let pooled_pg = tape.mean_pool(f_pg)?;
        let joint = tape.concat(pooled_gp, pooled_pg)?;
        let w = tape.param(&self.params, "cls.weight")?;
        let bias = tape.param(&self.params, "cls.bias")?;
        let z = tape.matmul(joint, w)?;
        let logits = tape.add_bias(z, bias)?;
        Ok(FusionVars { f_gp, f_pg, logits })
    }

    /// `(f_gp[m, d_a], f_pg[n, d_a])` for one sample.
    pub fn interact(&self, input: &FusionInput<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let (g, p) = self.inputs_on_tape(&mut tape, std::slice::from_ref(input))?;
        let vars = self.forward_on_tape(&mut tape, g, p)?;
        let strip = |t: &Tensor<T>| t.clone().reshape(&t.shape()[1..]);
        Ok((strip(tape.value(vars.f_gp))?, strip(tape.value(vars.f_pg))?))
    }

    fn inputs_on_tape(&self, tape: &mut Tape<T>, inputs: &[FusionInput<T>]) -> Result<(Var, Var)> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty fusion batch".into()))?;
        let stack = |sel: fn(&FusionInput<T>) -> &Tensor<T>| -> Result<Tensor<T>> {
            let shape0 = sel(first).shape().to_vec();
            let mut data = Vec::new();
            for x in inputs {
                if sel(x).shape() != shape0.as_slice() {
                    return Err(Error::Shape("fusion batch items differ in token count".into()));
                }
                data.extend_from_slice(sel(x).data());
            }
            let mut shape = vec![inputs.len()];
            shape.extend(shape0);
            Tensor::new(shape, data)
        };
        let mut g = stack(|x| &x.geometric)?;
        let mut p = stack(|x| &x.photometric)?;
        if let Some(sc) = &self.scaling {
            TokenScaling::apply(g.data_mut(), &sc.geometric_mean, &sc.geometric_scale);
            TokenScaling::apply(p.data_mut(), &sc.photometric_mean, &sc.photometric_scale);
        }
        let g = tape.input(g)?;
        let p = tape.input(p)?;
        Ok((g, p))
    }

    /// `(logits[3], liveness)` per sample; liveness is the live-class
    /// probability.
    pub fn predict(&self, inputs: &[FusionInput<T>]) -> Result<Vec<([T; 3], T)>> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(64) {
            let mut tape = Tape::new();
            let (g, p) = self.inputs_on_tape(&mut tape, chunk)?;
            let vars = self.forward_on_tape(&mut tape, g, p)?;
            for row in tape.value(vars.logits).data().chunks(3) {
                let probs = softmax(row)?;
                out.push(([row[0], row[1], row[2]], probs[0]));
            }
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self, epoch: usize, gcn_hash: &str) -> Checkpoint<T> {
        let metadata = serde_json::json!({
            "geometric_dim": self.geometric_dim,
            "photometric_dim": self.photometric_dim,
            "config": self.config,
            "config_hash": crate::hash::json_digest(&self.config),
            "gcn_hash": gcn_hash,
            "epoch": epoch,
        });
        let mut ck = Checkpoint::new(CHECKPOINT_KIND, metadata, &self.params);
        if let Some(sc) = &self.scaling {
            for (name, v) in SCALING_STATE.iter().zip(sc.parts()) {
                let t = Tensor::new(vec![v.len()], v.clone()).expect("vector shape");
                ck.state.insert(name.to_string(), TensorRecord::from_tensor(&t));
            }
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<Self> {
        let meta = &ck.metadata;
        let dim = |key: &str| {
            meta[key]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| Error::Checkpoint(format!("missing `{key}`")))
        };
        let config: FusionConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| Error::Checkpoint(format!("fusion config: {e}")))?;
        let mut model = Self::new(dim("geometric_dim")?, dim("photometric_dim")?, config, &mut ChaCha8Rng::seed_from_u64(0))?;
        ck.restore_params(&mut model.params)?;
        if ck.state.contains_key(SCALING_STATE[0]) {
            let get = |name: &str| ck.state_tensor(name).map(|t| t.data().to_vec());
            model.set_scaling(Some(TokenScaling {
                geometric_mean: get(SCALING_STATE[0])?,
                geometric_scale: get(SCALING_STATE[1])?,
                photometric_mean: get(SCALING_STATE[2])?,
                photometric_scale: get(SCALING_STATE[3])?,
            }))?;
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>, epoch: usize, gcn_hash: &str) -> Result<()> {
        self.to_checkpoint(epoch, gcn_hash).save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Checkpoint<T>)> {
        let ck = Checkpoint::load(path, CHECKPOINT_KIND)?;
        Ok((Self::from_checkpoint(&ck)?, ck))
    }
}

impl HasParams for FusionModel<f64> {
    fn params(&self) -> &ParamSet<f64> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<f64> {
        &mut self.params
    }
}

/// Logits and live probability for one sample.
pub fn fusion_forward<T: Scalar>(model: &FusionModel<T>, input: &FusionInput<T>) -> Result<([T; 3], T)> {
    Ok(model.predict(std::slice::from_ref(input))?[0])
}

/// Geometric tokens from a frozen GCN: the pooled `f_g` as one token, or the
/// node-averaged final map as one token per remaining time step.
pub fn geometric_tokens(
    gcn: &StgcnModel<f32>,
    seqs: &[LandmarkSequence],
    seq_len: usize,
    mode: TokenMode,
) -> Result<Vec<Tensor<f32>>> {
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(32) {
        let x = prepare_eval_batch(&chunk.iter().collect::<Vec<_>>(), seq_len)?;
        let mut tape = Tape::new();
        let xv = tape.input(x)?;
        let fwd = gcn.forward_on_tape(&mut tape, xv, Mode::Eval)?;
        match mode {
            TokenMode::Single => {
                let f = tape.value(fwd.features);
                let d = f.last_dim();
                for row in f.data().chunks(d) {
                    out.push(Tensor::new(vec![1, d], row.to_vec())?);
                }
            }
            TokenMode::Multi => {
                let map = tape.value(fwd.final_map);
                let (n, s, c) = (map.shape()[1], map.shape()[2], map.shape()[3]);
                let inv = 1.0 / n as f32;
                for item in map.data().chunks(n * s * c) {
                    let mut tokens = vec![0.0f32; s * c];
                    for node in item.chunks(s * c) {
                        for (acc, &v) in tokens.iter_mut().zip(node) {
                            *acc += v;
                        }
                    }
                    tokens.iter_mut().for_each(|v| *v *= inv);
                    out.push(Tensor::new(vec![s, c], tokens)?);
                }
            }
        }
    }
    Ok(out)
}

/// Photometric tokens: the feature vector, or its frame rows.
pub fn photometric_tokens<T: Scalar>(feature: &PhotometricFeature, mode: TokenMode) -> Result<Tensor<T>> {
    let d = feature.dim();
    match mode {
        TokenMode::Single => Tensor::from_f64(vec![1, d], &feature.feature),
        TokenMode::Multi => {
            let rows = feature.frames.as_ref().ok_or_else(|| Error::Record {
                id: feature.id.clone(),
                message: "multi-token fusion needs per-frame photometric features".into(),
            })?;
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            Tensor::from_f64(vec![rows.len(), d], &flat)
        }
    }
}

/// Assembles fusion inputs for `seqs`, failing on the first missing id.
pub fn build_inputs(
    gcn: &StgcnModel<f32>,
    seqs: &[LandmarkSequence],
    features: &BTreeMap<String, PhotometricFeature>,
    seq_len: usize,
    mode: TokenMode,
) -> Result<Vec<FusionInput<f32>>> {
    let photometric = seqs
        .iter()
        .map(|s| {
            let f = features.get(&s.id).ok_or_else(|| Error::Record {
                id: s.id.clone(),
                message: "no photometric feature for this id".into(),
            })?;
            photometric_tokens(f, mode)
        })
        .collect::<Result<Vec<_>>>()?;
    let geometric = geometric_tokens(gcn, seqs, seq_len, mode)?;
    Ok(geometric
        .into_iter()
        .zip(photometric)
        .map(|(geometric, photometric)| FusionInput { geometric, photometric })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionEpoch {
    pub epoch: usize,
    pub mean_loss: f64,
    pub dev_accuracy: f64,
    pub dev_auc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FusionHistory {
    pub epochs: Vec<FusionEpoch>,
    pub best_epoch: usize,
    pub best_dev_accuracy: f64,
    pub stopped_early: bool,
}

fn fusion_classes(seqs: &[LandmarkSequence], map: &MovementClassMap) -> Result<Vec<usize>> {
    seqs.iter()
        .map(|s| {
            map.movement_label(&s.label)
                .map(|(_, c)| c.index())
                .map_err(|e| Error::Record {
                    id: s.id.clone(),
                    message: e.to_string(),
                })
        })
        .collect()
}

/// Accuracy and live-vs-all AUC of `model` on prepared inputs.
fn evaluate(model: &FusionModel<f32>, inputs: &[FusionInput<f32>], classes: &[usize]) -> Result<(f64, f64)> {
    let preds = model.predict(inputs)?;
    let mut correct = 0usize;
    let (mut live, mut spoof) = (Vec::new(), Vec::new());
    for ((logits, score), &c) in preds.iter().zip(classes) {
        let arg = (0..3).fold(0, |best, i| if logits[i] > logits[best] { i } else { best });
        correct += usize::from(arg == c);
        if c == 0 {
            live.push(f64::from(*score));
        } else {
            spoof.push(f64::from(*score));
        }
    }
    let auc = if live.is_empty() || spoof.is_empty() {
        f64::NAN
    } else {
        auc_scores(&live, &spoof)?
    };
    Ok((correct as f64 / classes.len() as f64, auc))
}

/// Everything [`train_fusion`] rejects before computing features.
pub fn check_fusion_inputs(
    features: &BTreeMap<String, PhotometricFeature>,
    train: &[LandmarkSequence],
    dev: &[LandmarkSequence],
    class_map: &MovementClassMap,
    config: &FusionConfig,
) -> Result<()> {
    config.validate()?;
    class_map.validate()?;
    let train_classes = fusion_classes(train, class_map)?;
    fusion_classes(dev, class_map)?;
    for c in 0..3 {
        if !train_classes.contains(&c) {
            return Err(Error::Dataset(format!("fusion class {c} is absent from the training split")));
        }
    }
    if dev.is_empty() {
        return Err(Error::Dataset("dev split is empty".into()));
    }
    if let Some(s) = train.iter().chain(dev).find(|s| !features.contains_key(&s.id)) {
        return Err(Error::Dataset(format!("no photometric feature for `{}`", s.id)));
    }
    Ok(())
}

/// Trains the fusion head on frozen features. Returns the model with the
/// best dev accuracy (earliest on ties); stops after `patience` epochs
/// without improvement.
pub fn train_fusion(
    gcn: &StgcnModel<f32>,
    features: &BTreeMap<String, PhotometricFeature>,
    train: &[LandmarkSequence],
    dev: &[LandmarkSequence],
    class_map: &MovementClassMap,
    seq_len: usize,
    config: &FusionConfig,
    seed: u64,
) -> Result<(FusionModel<f32>, FusionHistory)> {
    check_fusion_inputs(features, train, dev, class_map, config)?;
    let train_classes = fusion_classes(train, class_map)?;
    let dev_classes = fusion_classes(dev, class_map)?;
    let train_in = build_inputs(gcn, train, features, seq_len, config.tokens)?;
    let dev_in = build_inputs(gcn, dev, features, seq_len, config.tokens)?;
    let d_g = train_in[0].geometric.last_dim();
    let d_p = train_in[0].photometric.last_dim();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = FusionModel::<f32>::new(d_g, d_p, config.clone(), &mut rng)?;
    if config.standardize {
        model.set_scaling(Some(TokenScaling::fit(&train_in)?))?;
    }
    let opt = Sgd {
        lr: config.lr,
        momentum: config.momentum,
        weight_decay: config.weight_decay,
    };
    let mut history = FusionHistory {
        best_dev_accuracy: f64::NEG_INFINITY,
        ..FusionHistory::default()
    };
    let mut best = model.clone();
    let mut order: Vec<usize> = (0..train_in.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for batch in order.chunks(config.batch_size) {
            let items: Vec<FusionInput<f32>> = batch.iter().map(|&i| train_in[i].clone()).collect();
            let classes: Vec<usize> = batch.iter().map(|&i| train_classes[i]).collect();
            let mut tape = Tape::new();
            let (g, p) = model.inputs_on_tape(&mut tape, &items)?;
            let vars = model.forward_on_tape(&mut tape, g, p)?;
            let loss = tape.cross_entropy_mean(vars.logits, &classes)?;
            loss_sum += f64::from(tape.value(loss).data()[0]);
            steps += 1;
            tape.backward(loss)?.accumulate_into(model.params_mut())?;
            sgd_step(model.params_mut(), opt)?;
        }
        let (acc, auc) = evaluate(&model, &dev_in, &dev_classes)?;
        let mean_loss = loss_sum / steps as f64;
        log::info!("fusion epoch {epoch}: loss {mean_loss:.6} dev_acc {acc:.4} dev_auc {auc:.4}");
        history.epochs.push(FusionEpoch {
            epoch,
            mean_loss,
            dev_accuracy: acc,
            dev_auc: auc,
        });
        if acc > history.best_dev_accuracy {
            history.best_dev_accuracy = acc;
            history.best_epoch = epoch;
            best = model.clone();
        } else if epoch - history.best_epoch >= config.patience {
            history.stopped_early = true;
            break;
        }
    }
    Ok((best, history))
}

/// Logistic-regression probe (full-batch gradient descent from zero) on
/// labeled vectors; returns the AUC of its scores on `test`.
pub fn linear_probe_auc(train: &[(Vec<f64>, bool)], test: &[(Vec<f64>, bool)], steps: usize, lr: f64) -> Result<f64> {
    let d = train
        .first()
        .map(|x| x.0.len())
        .ok_or_else(|| Error::InvalidArgument("empty probe training set".into()))?;
    let mut params = ParamSet::<f64>::new();
    params.insert("w", Tensor::zeros(&[d, 1]))?;
    params.insert("b", Tensor::zeros(&[1]))?;
    let flat: Vec<f64> = train.iter().flat_map(|x| x.0.iter().copied()).collect();
    let x = Tensor::new(vec![train.len(), d], flat)?;
    let labels: Vec<f64> = train.iter().map(|x| f64::from(u8::from(x.1))).collect();
    let opt = Sgd {
        lr,
        momentum: 0.0,
        weight_decay: 0.0,
    };
    for _ in 0..steps {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone())?;
        let w = tape.param(&params, "w")?;
        let b = tape.param(&params, "b")?;
        let z = tape.matmul(xv, w)?;
        let z = tape.add_bias(z, b)?;
        let loss = tape.bce_mean(z, &labels)?;
        tape.backward(loss)?.accumulate_into(&mut params)?;
        sgd_step(&mut params, opt)?;
    }
    let w = params.value("w").expect("inserted").data().to_vec();
    let b = params.value("b").expect("inserted").data()[0];
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (v, label) in test {
        let s = v.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>() + b;
        if *label {
            pos.push(s);
        } else {
            neg.push(s);
        }
    }
    auc_scores(&pos, &neg)
}
