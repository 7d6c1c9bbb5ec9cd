use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{LandmarkSequence, Point};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub rotation_prob: f64,
    pub max_rotation_deg: f64,
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation_prob: 0.5,
            max_rotation_deg: 10.0,
            flip_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            rotation_prob: 0.0,
            max_rotation_deg: 0.0,
            flip_prob: 0.0,
        }
    }
}

/// Rotates every frame by `theta` radians about the whole-sequence centroid.
pub fn rotate(seq: &LandmarkSequence, theta: f64) -> LandmarkSequence {
    let c = seq.centroid();
    let (s, co) = theta.sin_cos();
    let frames = seq
        .frames
        .iter()
        .map(|f| {
            f.iter()
                .map(|p| {
                    let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
                    [c[0] + co * dx - s * dy, c[1] + s * dx + co * dy]
                })
                .collect()
        })
        .collect();
    seq.with_frames(frames)
}

/// Mirrors x about the sequence centroid, then relabels nodes so that node
/// `i` of the output is node `perm[i]` of the mirrored input.
pub fn flip(seq: &LandmarkSequence, perm: Option<&[usize]>) -> Result<LandmarkSequence> {
    let n = seq.num_nodes();
    if let Some(p) = perm {
        if p.len() != n {
            return Err(Error::InvalidArgument(format!(
                "flip permutation has {} entries for {n} landmarks",
                p.len()
            )));
        }
    }
    let cx = seq.centroid()[0];
    let frames = seq
        .frames
        .iter()
        .map(|f| {
            let mirrored: Vec<Point> = f.iter().map(|p| [2.0 * cx - p[0], p[1]]).collect();
            match perm {
                Some(p) => p.iter().map(|&src| mirrored[src]).collect(),
                None => mirrored,
            }
        })
        .collect();
    Ok(seq.with_frames(frames))
}

/// Random rotation and horizontal flip; applied before normalization.
pub fn augment<R: Rng + ?Sized>(
    seq: &LandmarkSequence,
    rng: &mut R,
    config: &AugmentConfig,
    flip_permutation: Option<&[usize]>,
) -> Result<LandmarkSequence> {
    let mut out = seq.clone();
    if rng.random::<f64>() < config.rotation_prob {
        let max = config.max_rotation_deg.to_radians();
        let theta = if max > 0.0 { rng.random_range(-max..max) } else { 0.0 };
        out = rotate(&out, theta);
    }
    if rng.random::<f64>() < config.flip_prob {
        if flip_permutation.is_none() {
            log::warn!(
                "flipping `{}` without a node permutation; left/right landmark identities swap sides",
                seq.id
            );
        }
        out = flip(&out, flip_permutation)?;
    }
    Ok(out)
}
