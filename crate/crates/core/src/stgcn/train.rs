use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{sequences_to_tensor, Mode, StgcnConfig, StgcnModel};
use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::graph::FaceGraph;
use crate::kernels::sigmoid;
use crate::landmarks::{
    augment, normalize_sequence, select_inference_window, subsample_random, AugmentConfig,
    LandmarkSequence, MovementClassMap,
};
use crate::metrics::auc_scores;
use crate::optim::{sgd_step, Sgd};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainGcnConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplier applied after each milestone epoch.
    pub lr_decay: f64,
    pub lr_milestones: Vec<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Frames per training sample and inference window.
    pub seq_len: usize,
    pub augment: AugmentConfig,
    pub model: StgcnConfig,
}

impl Default for TrainGcnConfig {
    fn default() -> Self {
        Self {
            epochs: 65,
            batch_size: 16,
            lr: 0.1,
            lr_decay: 0.1,
            lr_milestones: vec![50],
            momentum: 0.9,
            weight_decay: 1e-4,
            seq_len: 64,
            augment: AugmentConfig::default(),
            model: StgcnConfig::default(),
        }
    }
}

impl TrainGcnConfig {
    /// Learning rate used during 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.lr_milestones.iter().filter(|&&m| epoch > m).count();
        self.lr * self.lr_decay.powi(passed as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.seq_len == 0 {
            return Err(Error::InvalidArgument(
                "epochs, batch_size and seq_len must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0) {
            return Err(Error::InvalidArgument("learning rate and decay must be positive".into()));
        }
        self.model.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GcnEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub dev_auc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GcnHistory {
    pub epochs: Vec<GcnEpoch>,
    pub best_epoch: usize,
    pub best_dev_auc: f64,
}

fn movement_targets(seqs: &[LandmarkSequence], map: &MovementClassMap) -> Result<Vec<f32>> {
    seqs.iter()
        .map(|s| {
            map.movement_label(&s.label)
                .map(|(l, _)| f32::from(l))
                .map_err(|e| Error::Record {
                    id: s.id.clone(),
                    message: e.to_string(),
                })
        })
        .collect()
}

fn require_both_classes(targets: &[f32], what: &str) -> Result<()> {
    let pos = targets.iter().filter(|&&t| t > 0.5).count();
    if targets.is_empty() {
        return Err(Error::Dataset(format!("{what} split is empty")));
    }
    if pos == 0 || pos == targets.len() {
        return Err(Error::Dataset(format!(
            "{what} split has a single movement class; AUC is undefined"
        )));
    }
    Ok(())
}

/// Inference windows, normalized and stacked: `[B, N, S, 2]`.
pub fn prepare_eval_batch(seqs: &[&LandmarkSequence], s: usize) -> Result<Tensor<f32>> {
    let prepared = seqs
        .iter()
        .map(|seq| Ok(normalize_sequence(&select_inference_window(seq, s)?)))
        .collect::<Result<Vec<_>>>()?;
    sequences_to_tensor(&prepared.iter().collect::<Vec<_>>())
}

/// Evaluation-mode `(f_g, logit)` for each sequence, batched in fixed chunks.
pub fn score_sequences(
    model: &StgcnModel<f32>,
    seqs: &[LandmarkSequence],
    s: usize,
) -> Result<Vec<(Vec<f32>, f32)>> {
    const CHUNK: usize = 32;
    let d = model.feature_dim();
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(CHUNK) {
        let x = prepare_eval_batch(&chunk.iter().collect::<Vec<_>>(), s)?;
        let (f, z) = model.forward(&x)?;
        for (i, &logit) in z.data().iter().enumerate() {
            out.push((f.data()[i * d..(i + 1) * d].to_vec(), logit));
        }
    }
    Ok(out)
}

fn dev_auc(model: &StgcnModel<f32>, dev: &[LandmarkSequence], targets: &[f32], s: usize) -> Result<f64> {
    let scored = score_sequences(model, dev, s)?;
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for ((_, logit), &t) in scored.iter().zip(targets) {
        let p = f64::from(sigmoid(*logit));
        if t > 0.5 {
            pos.push(p);
        } else {
            neg.push(p);
        }
    }
    auc_scores(&pos, &neg)
}

/// Everything [`train_gcn`] rejects, checked without training.
pub fn check_gcn_inputs(
    train: &[LandmarkSequence],
    dev: &[LandmarkSequence],
    graph: &FaceGraph,
    class_map: &MovementClassMap,
    config: &TrainGcnConfig,
) -> Result<()> {
    config.validate()?;
    class_map.validate()?;
    let n = graph.num_nodes();
    for seq in train.iter().chain(dev) {
        seq.validate(n)?;
    }
    require_both_classes(&movement_targets(train, class_map)?, "train")?;
    require_both_classes(&movement_targets(dev, class_map)?, "dev")
}

/// Trains the geometric branch on movement labels and returns the
/// checkpoint with the best dev AUC (earliest on ties).
pub fn train_gcn(
    train: &[LandmarkSequence],
    dev: &[LandmarkSequence],
    graph: &FaceGraph,
    class_map: &MovementClassMap,
    config: &TrainGcnConfig,
    seed: u64,
) -> Result<(StgcnModel<f32>, GcnHistory)> {
    check_gcn_inputs(train, dev, graph, class_map, config)?;
    let train_targets = movement_targets(train, class_map)?;
    let dev_targets = movement_targets(dev, class_map)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = StgcnModel::<f32>::new(config.model.clone(), graph.clone(), &mut rng)?;
    let flip = graph.flip_permutation();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = GcnHistory {
        best_dev_auc: f64::NEG_INFINITY,
        ..GcnHistory::default()
    };
    let mut best = model.clone();

    for epoch in 1..=config.epochs {
        let lr = config.lr_at(epoch);
        let opt = Sgd {
            lr,
            momentum: config.momentum,
            weight_decay: config.weight_decay,
        };
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for batch in order.chunks(config.batch_size) {
            // batch statistics of a single item are degenerate
            if config.model.batch_norm && batch.len() < 2 {
                continue;
            }
            let mut items = Vec::with_capacity(batch.len());
            let mut labels = Vec::with_capacity(batch.len());
            for &i in batch {
                let seq = augment(&train[i], &mut rng, &config.augment, flip)?;
                let seq = subsample_random(&seq, config.seq_len, &mut rng)?;
                items.push(normalize_sequence(&seq));
                labels.push(train_targets[i]);
            }
            let x = sequences_to_tensor::<f32>(&items.iter().collect::<Vec<_>>())?;
            let mut tape = Tape::new();
            let xv = tape.input(x)?;
            let fwd = model.forward_on_tape(&mut tape, xv, Mode::Train)?;
            let loss = tape.bce_mean(fwd.logits, &labels)?;
            loss_sum += f64::from(tape.value(loss).data()[0]);
            steps += 1;
            let grads = tape.backward(loss)?;
            grads.accumulate_into(model.params_mut())?;
            sgd_step(model.params_mut(), opt)?;
            model.update_running(&fwd.batch_stats);
        }
        let auc = dev_auc(&model, dev, &dev_targets, config.seq_len)?;
        let mean_loss = if steps > 0 { loss_sum / steps as f64 } else { f64::NAN };
        log::info!("gcn epoch {epoch}: lr {lr} loss {mean_loss:.6} dev_auc {auc:.6}");
        history.epochs.push(GcnEpoch {
            epoch,
            lr,
            mean_loss,
            dev_auc: auc,
        });
        if auc > history.best_dev_auc {
            history.best_dev_auc = auc;
            history.best_epoch = epoch;
            best = model.clone();
        }
    }
    Ok((best, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule() {
        let c = TrainGcnConfig::default();
        assert_eq!(c.lr_at(1), 0.1);
        assert_eq!(c.lr_at(50), 0.1);
        assert!((c.lr_at(51) - 0.01).abs() < 1e-15);
        assert!((c.lr_at(65) - 0.01).abs() < 1e-15);
    }
}
