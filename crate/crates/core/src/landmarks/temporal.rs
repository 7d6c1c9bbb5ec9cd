use rand::Rng;

use super::{LandmarkSequence, Point};
use crate::error::{Error, Result};

/// Per-axis min-max normalization of one frame into `[0, 1]`. An axis with
/// zero extent maps every landmark to `0.5`.
pub fn normalize_frame(frame: &[Point]) -> Vec<Point> {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in frame {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    frame
        .iter()
        .map(|p| {
            let mut q = [0.5; 2];
            for a in 0..2 {
                let extent = hi[a] - lo[a];
                if extent > 0.0 {
                    q[a] = (p[a] - lo[a]) / extent;
                }
            }
            q
        })
        .collect()
}

/// Applies [`normalize_frame`] to every frame.
pub fn normalize_sequence(seq: &LandmarkSequence) -> LandmarkSequence {
    seq.with_frames(seq.frames.iter().map(|f| normalize_frame(f)).collect())
}

fn check_length(s: usize) -> Result<()> {
    if s < 1 {
        Err(Error::InvalidArgument("sub-sampling length must be >= 1".into()))
    } else {
        Ok(())
    }
}

/// Extends a sequence to `s` frames by open reflection:
/// `[f1, f2, f3] -> [f1, f2, f3, f2, f1, f2, ...]`.
pub fn mirror_pad(seq: &LandmarkSequence, s: usize) -> Result<LandmarkSequence> {
    check_length(s)?;
    let t = seq.num_frames();
    if t == 0 {
        return Err(Error::Record {
            id: seq.id.clone(),
            message: "cannot pad an empty sequence".into(),
        });
    }
    if t > s {
        return Err(Error::InvalidArgument(format!(
            "mirror_pad: sequence has {t} frames, more than the target {s}"
        )));
    }
    let frames = (0..s)
        .map(|i| {
            let idx = if t == 1 {
                0
            } else {
                let period = 2 * (t - 1);
                let r = i % period;
                if r < t {
                    r
                } else {
                    period - r
                }
            };
            seq.frames[idx].clone()
        })
        .collect();
    Ok(seq.with_frames(frames))
}

/// Picks `s` distinct frames uniformly at random, kept in temporal order;
/// shorter sequences are mirror-padded instead.
pub fn subsample_random<R: Rng + ?Sized>(
    seq: &LandmarkSequence,
    s: usize,
    rng: &mut R,
) -> Result<LandmarkSequence> {
    check_length(s)?;
    let t = seq.num_frames();
    if t < s {
        return mirror_pad(seq, s);
    }
    let mut idx = rand::seq::index::sample(rng, t, s).into_vec();
    idx.sort_unstable();
    Ok(seq.with_frames(idx.into_iter().map(|i| seq.frames[i].clone()).collect()))
}

/// Sum over landmarks of the positional variance (x and y) within
/// frames `start..start+len`.
pub fn window_motion_score(seq: &LandmarkSequence, start: usize, len: usize) -> f64 {
    let window = &seq.frames[start..start + len];
    let n = seq.num_nodes();
    let inv = 1.0 / len as f64;
    let mut total = 0.0;
    for node in 0..n {
        for axis in 0..2 {
            let mut mean = 0.0;
            for frame in window {
                mean += frame[node][axis];
            }
            mean *= inv;
            let mut var = 0.0;
            for frame in window {
                let d = frame[node][axis] - mean;
                var += d * d;
            }
            total += var * inv;
        }
    }
    total
}

/// Start of the contiguous length-`s` window with the largest motion score;
/// ties resolve to the earliest window. `None` when the sequence is shorter
/// than `s`.
pub fn inference_window_start(seq: &LandmarkSequence, s: usize) -> Result<Option<usize>> {
    check_length(s)?;
    let t = seq.num_frames();
    if t < s {
        return Ok(None);
    }
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for start in 0..=t - s {
        let score = window_motion_score(seq, start, s);
        if score > best_score {
            best = start;
            best_score = score;
        }
    }
    Ok(Some(best))
}

/// Deterministic frame selection for inference: the highest-variance window
/// of length `s`, or the mirror-padded sequence when it is shorter.
pub fn select_inference_window(seq: &LandmarkSequence, s: usize) -> Result<LandmarkSequence> {
    match inference_window_start(seq, s)? {
        Some(start) => Ok(seq.with_frames(seq.frames[start..start + s].to_vec())),
        None => mirror_pad(seq, s),
    }
}
