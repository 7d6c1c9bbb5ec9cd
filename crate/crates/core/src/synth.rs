//! Synthetic landmark-motion datasets with known movement classes, paired
//! with Gaussian stand-in photometric features.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{write_photometric_features, PhotometricFeature};
use crate::graph::{build_template_graph, write_graph, FaceGraph, Region, TemplateConfig};
use crate::hash::{derive_seed, json_digest};
use crate::landmarks::{write_manifest, write_sequences, LandmarkSequence, MovementClassMap, Point, Split};
use crate::metrics::{auc_scores, mann_whitney_p};
use crate::protocol::{FEATURES_FILE, LANDMARKS_FILE, MANIFEST_FILE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceKind {
    Live,
    Replay,
    PrintRigid,
    PrintBent,
    MaskRigid,
}

impl SequenceKind {
    pub const ALL: [SequenceKind; 5] = [
        SequenceKind::Live,
        SequenceKind::Replay,
        SequenceKind::PrintRigid,
        SequenceKind::PrintBent,
        SequenceKind::MaskRigid,
    ];

    pub fn label(self) -> &'static str {
        match self {
            SequenceKind::Live => "live",
            SequenceKind::Replay => "replay",
            SequenceKind::PrintRigid => "print_rigid",
            SequenceKind::PrintBent => "print_bent",
            SequenceKind::MaskRigid => "mask_rigid",
        }
    }

    /// Articulated facial motion (blinks, mouth) rather than a moving object.
    pub fn moves_normally(self) -> bool {
        matches!(self, SequenceKind::Live | SequenceKind::Replay)
    }
}

impl fmt::Display for SequenceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for SequenceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SequenceKind::ALL
            .into_iter()
            .find(|k| k.label() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown sequence kind `{s}`")))
    }
}

/// Motion model parameters. Lengths are in template units (face width
/// about 0.85), rates in Hz, angles in degrees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionParams {
    /// Per-subject static perturbation of the template.
    pub shape_sigma: f64,
    pub blink_rate: f64,
    /// Fraction of the eye height closed at the blink peak.
    pub blink_amplitude: f64,
    pub mouth_rate: f64,
    /// Peak downward displacement of the lower lip.
    pub mouth_amplitude: f64,
    /// Per-frame rigid jitter of live-looking faces (translation σ).
    pub jitter_sigma: f64,
    pub jitter_rotation_deg: f64,
    /// Smooth rigid trajectory of prints and masks.
    pub translation_amplitude: f64,
    pub rotation_amplitude_deg: f64,
    pub rigid_rate: f64,
    /// Range of the bend coefficient `c` in `y += c(t) (x - x_c)^2`.
    pub bend_min: f64,
    pub bend_max: f64,
    pub bend_rate: f64,
    /// Landmark noise σ_n.
    pub noise_sigma: f64,
    /// Relative spread of per-sequence rates and amplitudes.
    pub variability: f64,
}

impl Default for MotionParams {
    fn default() -> Self {
        Self {
            shape_sigma: 0.005,
            blink_rate: 1.2,
            blink_amplitude: 0.8,
            mouth_rate: 0.9,
            mouth_amplitude: 0.04,
            jitter_sigma: 0.003,
            jitter_rotation_deg: 0.5,
            translation_amplitude: 0.05,
            rotation_amplitude_deg: 6.0,
            rigid_rate: 0.6,
            bend_min: 0.03,
            bend_max: 0.08,
            bend_rate: 0.8,
            noise_sigma: 0.002,
            variability: 0.2,
        }
    }
}

impl MotionParams {
    /// Every amplitude and noise level zero.
    pub fn still() -> Self {
        Self {
            shape_sigma: 0.0,
            blink_amplitude: 0.0,
            mouth_amplitude: 0.0,
            jitter_sigma: 0.0,
            jitter_rotation_deg: 0.0,
            translation_amplitude: 0.0,
            rotation_amplitude_deg: 0.0,
            bend_min: 0.0,
            bend_max: 0.0,
            noise_sigma: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            self.shape_sigma,
            self.blink_rate,
            self.blink_amplitude,
            self.mouth_rate,
            self.mouth_amplitude,
            self.jitter_sigma,
            self.jitter_rotation_deg,
            self.translation_amplitude,
            self.rotation_amplitude_deg,
            self.rigid_rate,
            self.bend_rate,
            self.noise_sigma,
        ];
        if nonneg.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument("motion parameters must be finite and >= 0".into()));
        }
        if !(self.bend_min <= self.bend_max) || !(0.0..1.0).contains(&self.variability) {
            return Err(Error::InvalidArgument(
                "need bend_min <= bend_max and variability in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhotometricParams {
    pub dim: usize,
    /// Distance between the live and spoof means at zero overlap.
    pub separation: f64,
    /// Isotropic standard deviation shared by both classes.
    pub sigma: f64,
    /// 0 = fully separated means, 1 = identical means.
    pub overlap: f64,
    /// Per-frame feature rows to emit (0 = vector only).
    pub frames: usize,
}

impl Default for PhotometricParams {
    fn default() -> Self {
        Self {
            dim: 32,
            separation: 3.0,
            sigma: 1.0,
            overlap: 0.6,
            frames: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitFractions {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.6,
            dev: 0.2,
            test: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub template: TemplateConfig,
    pub counts: BTreeMap<SequenceKind, usize>,
    /// Raw frames per sequence.
    pub frames: usize,
    pub fps: f64,
    pub motion: MotionParams,
    pub photometric: PhotometricParams,
    pub splits: SplitFractions,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            template: TemplateConfig::desk(),
            counts: SequenceKind::ALL.into_iter().map(|k| (k, 100)).collect(),
            frames: 48,
            fps: 30.0,
            motion: MotionParams::default(),
            photometric: PhotometricParams::default(),
            splits: SplitFractions::default(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Live and replay in equal numbers plus the same number of abnormal
    /// attacks spread over the three rigid/bent kinds.
    pub fn fused(per_class: usize) -> Self {
        let third = per_class / 3;
        let counts = [
            (SequenceKind::Live, per_class),
            (SequenceKind::Replay, per_class),
            (SequenceKind::PrintRigid, per_class - 2 * third),
            (SequenceKind::PrintBent, third),
            (SequenceKind::MaskRigid, third),
        ]
        .into_iter()
        .collect();
        Self {
            counts,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.motion.validate()?;
        let p = &self.photometric;
        if p.dim == 0 || !(p.sigma > 0.0) || !(0.0..=1.0).contains(&p.overlap) || !(p.separation >= 0.0) {
            return Err(Error::InvalidArgument(
                "photometric: dim > 0, sigma > 0, separation >= 0, overlap in [0, 1]".into(),
            ));
        }
        if self.frames == 0 || !(self.fps > 0.0) {
            return Err(Error::InvalidArgument("frames and fps must be positive".into()));
        }
        let s = &self.splits;
        if [s.train, s.dev, s.test].iter().any(|f| !(*f >= 0.0)) || ((s.train + s.dev + s.test) - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument("split fractions must be >= 0 and sum to 1".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        json_digest(self)
    }
}

/// Canonical landmark positions plus the region layout they came from.
#[derive(Clone, Debug)]
pub struct Template {
    pub config: TemplateConfig,
    pub graph: FaceGraph,
    pub positions: Vec<Point>,
}

impl Template {
    pub fn build(config: &TemplateConfig) -> Result<Self> {
        let (graph, positions) = build_template_graph(config)?;
        Ok(Self {
            config: config.clone(),
            graph,
            positions,
        })
    }
}

fn mean_point(points: &[Point]) -> Point {
    let inv = 1.0 / points.len() as f64;
    let (sx, sy) = points.iter().fold((0.0, 0.0), |(a, b), p| (a + p[0], b + p[1]));
    [sx * inv, sy * inv]
}

/// `x + (R(θ) - I)(x - c) + τ`, exact when `θ = 0` and `τ = 0`.
fn rigid(p: Point, c: Point, theta: f64, tau: Point) -> Point {
    let (s, co) = theta.sin_cos();
    let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
    [
        p[0] + ((co - 1.0) * dx - s * dy) + tau[0],
        p[1] + (s * dx + (co - 1.0) * dy) + tau[1],
    ]
}

fn vary<R: Rng + ?Sized>(value: f64, spread: f64, rng: &mut R) -> f64 {
    if spread > 0.0 {
        value * rng.random_range(1.0 - spread..1.0 + spread)
    } else {
        value
    }
}

fn normal(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma).expect("sigma is finite and >= 0")
}

/// Frames of one synthetic sequence.
pub fn generate_sequence<R: Rng + ?Sized>(
    kind: SequenceKind,
    template: &Template,
    params: &MotionParams,
    frames: usize,
    fps: f64,
    rng: &mut R,
) -> Vec<Vec<Point>> {
    let p = params;
    let cfg = &template.config;
    let shape_noise = normal(p.shape_sigma);
    let base: Vec<Point> = template
        .positions
        .iter()
        .map(|q| {
            if p.shape_sigma > 0.0 {
                [q[0] + shape_noise.sample(rng), q[1] + shape_noise.sample(rng)]
            } else {
                *q
            }
        })
        .collect();
    let center = mean_point(&base);
    let eyes = [Region::LeftEye, Region::RightEye].map(|r| {
        let range = cfg.region_nodes(r);
        (range.clone(), mean_point(&base[range]))
    });
    let mouth = cfg.region_nodes(Region::Mouth);
    let two_pi = 2.0 * PI;
    let phase = |rng: &mut R| rng.random_range(0.0..two_pi);

    let blink_f = vary(p.blink_rate, p.variability, rng);
    let blink_a = vary(p.blink_amplitude, p.variability, rng);
    let blink_phase = phase(rng);
    let mouth_f = vary(p.mouth_rate, p.variability, rng);
    let mouth_a = vary(p.mouth_amplitude, p.variability, rng);
    let mouth_phase = phase(rng);
    let rigid_f = vary(p.rigid_rate, p.variability, rng);
    let rot_a = vary(p.rotation_amplitude_deg, p.variability, rng).to_radians();
    let tr_a = vary(p.translation_amplitude, p.variability, rng);
    let rigid_phases = [phase(rng), phase(rng), phase(rng)];
    let bend_c = if p.bend_max > p.bend_min {
        rng.random_range(p.bend_min..p.bend_max)
    } else {
        p.bend_min
    };
    let bend_f = vary(p.bend_rate, p.variability, rng);
    let bend_phase = phase(rng);
    let jitter = normal(p.jitter_sigma);
    let jitter_rot = normal(p.jitter_rotation_deg.to_radians());
    let noise = normal(p.noise_sigma);

    (0..frames)
        .map(|t| {
            let time = t as f64 / fps;
            let mut frame = base.clone();
            let (theta, tau) = if kind.moves_normally() {
                // Short blink pulses and an independent mouth envelope.
                let blink = (0.5 * (1.0 + (two_pi * blink_f * time + blink_phase).cos())).powi(6);
                for (range, c) in &eyes {
                    for q in &mut frame[range.clone()] {
                        q[1] = c[1] + (q[1] - c[1]) * (1.0 - blink_a * blink);
                    }
                }
                let open = 0.5 * (1.0 + (two_pi * mouth_f * time + mouth_phase).sin());
                let mc = mean_point(&base[mouth.clone()]);
                for q in &mut frame[mouth.clone()] {
                    if q[1] < mc[1] {
                        q[1] -= mouth_a * open * (mc[1] - q[1]) / MOUTH_HALF_HEIGHT;
                    }
                }
                let theta = if p.jitter_rotation_deg > 0.0 { jitter_rot.sample(rng) } else { 0.0 };
                let tau = if p.jitter_sigma > 0.0 {
                    [jitter.sample(rng), jitter.sample(rng)]
                } else {
                    [0.0, 0.0]
                };
                (theta, tau)
            } else {
                if kind == SequenceKind::PrintBent {
                    let c = bend_c * (two_pi * bend_f * time + bend_phase).sin();
                    for q in &mut frame {
                        let dx = q[0] - center[0];
                        q[1] += c * dx * dx;
                    }
                }
                let w = two_pi * rigid_f * time;
                (
                    rot_a * (w + rigid_phases[0]).sin(),
                    [tr_a * (w + rigid_phases[1]).sin(), tr_a * (w + rigid_phases[2]).sin()],
                )
            };
            for q in &mut frame {
                *q = rigid(*q, center, theta, tau);
                if p.noise_sigma > 0.0 {
                    q[0] += noise.sample(rng);
                    q[1] += noise.sample(rng);
                }
            }
            frame
        })
        .collect()
}

/// Lower-lip displacement grows with depth below the mouth center, reaching
/// the full amplitude at this depth; the corners stay put.
const MOUTH_HALF_HEIGHT: f64 = crate::graph::MOUTH_RADII[1];

/// Root-mean-square distance left after the best similarity transform
/// (rotation, uniform scale, translation) of `frame` onto `reference`.
pub fn procrustes_residual(reference: &[Point], frame: &[Point]) -> f64 {
    let n = reference.len() as f64;
    let (cr, cf) = (mean_point(reference), mean_point(frame));
    // Treat centered points as complex numbers; the optimal map is y ≈ a·x
    // with a = <x, y> / <x, x>.
    let (mut xx, mut re, mut im) = (0.0, 0.0, 0.0);
    for (r, f) in reference.iter().zip(frame) {
        let (xr, xi) = (f[0] - cf[0], f[1] - cf[1]);
        let (yr, yi) = (r[0] - cr[0], r[1] - cr[1]);
        xx += xr * xr + xi * xi;
        re += xr * yr + xi * yi;
        im += xr * yi - xi * yr;
    }
    let (ar, ai) = if xx > 0.0 { (re / xx, im / xx) } else { (0.0, 0.0) };
    // Summing the residuals directly avoids the cancellation in
    // |y|^2 - |<x, y>|^2 / |x|^2.
    let mut ss = 0.0;
    for (r, f) in reference.iter().zip(frame) {
        let (xr, xi) = (f[0] - cf[0], f[1] - cf[1]);
        let (yr, yi) = (r[0] - cr[0], r[1] - cr[1]);
        let (er, ei) = (yr - (ar * xr - ai * xi), yi - (ar * xi + ai * xr));
        ss += er * er + ei * ei;
    }
    (ss / n).sqrt()
}

/// Mean Procrustes residual of every frame against the first.
pub fn sequence_residual(seq: &LandmarkSequence) -> f64 {
    let first = &seq.frames[0];
    let t = seq.num_frames();
    if t < 2 {
        return 0.0;
    }
    seq.frames[1..].iter().map(|f| procrustes_residual(first, f)).sum::<f64>() / (t - 1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Certification {
    /// Residual AUC of normal-movement against abnormal-movement sequences.
    pub residual_auc: f64,
    /// Mann–Whitney p-value, live residuals against replay residuals.
    pub live_replay_p: f64,
}

impl Certification {
    pub const MIN_AUC: f64 = 0.99;
    pub const MIN_P: f64 = 0.01;

    pub fn passed(&self) -> bool {
        self.residual_auc >= Self::MIN_AUC && self.live_replay_p > Self::MIN_P
    }
}

/// Checks that the Procrustes residual alone separates the movement
/// classes and cannot tell live from replay.
pub fn certify(seqs: &[LandmarkSequence], class_map: &MovementClassMap) -> Result<Certification> {
    let (mut normal_r, mut abnormal_r, mut live_r, mut replay_r) = (vec![], vec![], vec![], vec![]);
    for s in seqs {
        let r = sequence_residual(s);
        let (lg, _) = class_map.movement_label(&s.label)?;
        if lg == 1 {
            normal_r.push(r);
        } else {
            abnormal_r.push(r);
        }
        match s.label.as_str() {
            "live" => live_r.push(r),
            "replay" => replay_r.push(r),
            _ => {}
        }
    }
    let residual_auc = auc_scores(&normal_r, &abnormal_r)?;
    let live_replay_p = if live_r.is_empty() || replay_r.is_empty() {
        1.0
    } else {
        mann_whitney_p(&live_r, &replay_r)?
    };
    Ok(Certification {
        residual_auc,
        live_replay_p,
    })
}

/// One record of a generated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthRecord {
    pub kind: SequenceKind,
    pub split: Split,
    pub sequence: LandmarkSequence,
    pub feature: PhotometricFeature,
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub template: Template,
    pub records: Vec<SynthRecord>,
}

impl SynthDataset {
    pub fn split(&self, split: Split) -> Vec<LandmarkSequence> {
        self.records
            .iter()
            .filter(|r| r.split == split)
            .map(|r| r.sequence.clone())
            .collect()
    }

    pub fn sequences(&self) -> Vec<LandmarkSequence> {
        self.records.iter().map(|r| r.sequence.clone()).collect()
    }
}

fn photometric_feature<R: Rng + ?Sized>(
    id: &str,
    spoof: bool,
    p: &PhotometricParams,
    rng: &mut R,
) -> PhotometricFeature {
    // Means differ along the all-ones direction.
    let shift = if spoof {
        (1.0 - p.overlap) * p.separation / (p.dim as f64).sqrt()
    } else {
        0.0
    };
    let noise = normal(p.sigma);
    let feature: Vec<f64> = (0..p.dim).map(|_| shift + noise.sample(rng)).collect();
    let frames = (p.frames > 0).then(|| {
        let mut rows: Vec<Vec<f64>> = (0..p.frames)
            .map(|_| (0..p.dim).map(|_| noise.sample(rng)).collect())
            .collect();
        // Center the per-frame deviations so their mean is the feature.
        for j in 0..p.dim {
            let m = rows.iter().map(|r| r[j]).sum::<f64>() / p.frames as f64;
            for r in &mut rows {
                r[j] = feature[j] + (r[j] - m);
            }
        }
        rows
    });
    PhotometricFeature {
        id: id.to_string(),
        feature,
        frames,
    }
}

/// Generates every sequence and feature in a fixed order (kinds in
/// declaration order, then index). Splits are stratified per kind.
pub fn generate_dataset(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let template = Template::build(&config.template)?;
    let mut records = Vec::new();
    for (&kind, &count) in &config.counts {
        let mut split_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &format!("split/{kind}")));
        let mut order: Vec<usize> = (0..count).collect();
        order.shuffle(&mut split_rng);
        let n_train = (config.splits.train * count as f64).round() as usize;
        let n_dev = ((config.splits.dev * count as f64).round() as usize).min(count - n_train);
        let mut splits = vec![Split::Test; count];
        for (rank, &i) in order.iter().enumerate() {
            splits[i] = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_dev {
                Split::Dev
            } else {
                Split::Test
            };
        }
        for (i, split) in splits.into_iter().enumerate() {
            let id = format!("{kind}_{i:04}");
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &id));
            let frames = generate_sequence(kind, &template, &config.motion, config.frames, config.fps, &mut rng);
            let mut prng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &format!("{id}/photometric")));
            let feature = photometric_feature(&id, kind != SequenceKind::Live, &config.photometric, &mut prng);
            records.push(SynthRecord {
                kind,
                split,
                sequence: LandmarkSequence {
                    id,
                    label: kind.label().to_string(),
                    fps: config.fps,
                    frames,
                },
                feature,
            });
        }
    }
    Ok(SynthDataset { template, records })
}

pub const GRAPH_FILE: &str = "graph.json";
pub const META_FILE: &str = "synth_meta.json";

/// Writes landmarks, features, manifest, graph and a metadata file (labels
/// and the generator hash) into `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, config: &SynthConfig, data: &SynthDataset) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_sequences(dir.join(LANDMARKS_FILE), &data.sequences())?;
    let features: Vec<PhotometricFeature> = data.records.iter().map(|r| r.feature.clone()).collect();
    write_photometric_features(dir.join(FEATURES_FILE), &features)?;
    let manifest: Vec<(String, Split)> = data
        .records
        .iter()
        .map(|r| (r.sequence.id.clone(), r.split))
        .collect();
    write_manifest(dir.join(MANIFEST_FILE), &manifest)?;
    write_graph(dir.join(GRAPH_FILE), &data.template.graph)?;
    let labels: BTreeMap<&str, &str> = data
        .records
        .iter()
        .map(|r| (r.sequence.id.as_str(), r.kind.label()))
        .collect();
    let meta = serde_json::json!({
        "generator_hash": config.hash(),
        "labels": labels,
    });
    let path = dir.join(META_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| Error::io(&path, e))
}
