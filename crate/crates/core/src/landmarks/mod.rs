//! Landmark sequences: the model input and everything done to it before it
//! reaches the graph network.

mod augment;
mod io;
mod movement;
mod temporal;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use augment::{augment, flip, rotate, AugmentConfig};
pub use io::{load_manifest, load_sequences, write_manifest, write_sequences, Split};
pub use movement::{FusionClass, MovementClassMap};
pub use temporal::{
    inference_window_start, mirror_pad, normalize_frame, normalize_sequence, select_inference_window,
    subsample_random, window_motion_score,
};

/// A 2-D landmark position `(x, y)`.
pub type Point = [f64; 2];

/// A labeled sequence of `T` frames with `N` landmarks each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandmarkSequence {
    pub id: String,
    pub label: String,
    pub fps: f64,
    pub frames: Vec<Vec<Point>>,
}

impl LandmarkSequence {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.frames.first().map_or(0, Vec::len)
    }

    /// Same id, label, and rate with different frames.
    pub fn with_frames(&self, frames: Vec<Vec<Point>>) -> Self {
        Self {
            id: self.id.clone(),
            label: self.label.clone(),
            fps: self.fps,
            frames,
        }
    }

    pub fn validate(&self, expected_n: usize) -> Result<()> {
        let err = |message: String| Error::Record {
            id: self.id.clone(),
            message,
        };
        if self.frames.is_empty() {
            return Err(err("sequence has no frames".into()));
        }
        if !(self.fps > 0.0) || !self.fps.is_finite() {
            return Err(err(format!("fps must be positive, got {}", self.fps)));
        }
        for (t, frame) in self.frames.iter().enumerate() {
            if frame.len() != expected_n {
                return Err(err(format!(
                    "frame {t} has {} landmarks, expected {expected_n}",
                    frame.len()
                )));
            }
            if frame.iter().flatten().any(|c| !c.is_finite()) {
                return Err(err(format!("frame {t} has a non-finite coordinate")));
            }
        }
        Ok(())
    }

    /// Mean position over every landmark of every frame.
    pub fn centroid(&self) -> Point {
        let mut sum = [0.0; 2];
        let mut count = 0usize;
        for p in self.frames.iter().flatten() {
            sum[0] += p[0];
            sum[1] += p[1];
            count += 1;
        }
        [sum[0] / count as f64, sum[1] / count as f64]
    }
}
