//! Presentation-attack metrics over liveness scores (higher = more live).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: String,
    /// Attack type, or a live label.
    pub label: String,
    pub live: bool,
    pub score: f64,
}

impl ScoreRecord {
    pub fn new(id: impl Into<String>, label: impl Into<String>, live: bool, score: f64) -> Self {
        Self {
            id: id.into(),
            label: label.into(),
            live,
            score,
        }
    }
}

fn split_scores(records: &[ScoreRecord]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut live = Vec::new();
    let mut spoof = Vec::new();
    for r in records {
        if !r.score.is_finite() {
            return Err(Error::NonFinite(format!("score of `{}`", r.id)));
        }
        if r.live {
            live.push(r.score);
        } else {
            spoof.push(r.score);
        }
    }
    if live.is_empty() || spoof.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "need both live and spoof scores (got {} live, {} spoof)",
            live.len(),
            spoof.len()
        )));
    }
    Ok((live, spoof))
}

/// Area under the ROC curve of two score samples: the probability that a
/// random positive outscores a random negative, ties counting one half.
pub fn auc_scores(positive: &[f64], negative: &[f64]) -> Result<f64> {
    if positive.is_empty() || negative.is_empty() {
        return Err(Error::InvalidArgument("AUC needs both classes".into()));
    }
    if positive.iter().chain(negative).any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("AUC scores".into()));
    }
    // Midranks over the pooled sample.
    let mut all: Vec<(f64, bool)> = positive
        .iter()
        .map(|&s| (s, true))
        .chain(negative.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * all[i..=j].iter().filter(|x| x.1).count() as f64;
        i = j + 1;
    }
    let (np, nn) = (positive.len() as f64, negative.len() as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Two-sided Mann–Whitney U test p-value (normal approximation with tie
/// correction).
pub fn mann_whitney_p(a: &[f64], b: &[f64]) -> Result<f64> {
    use statrs::distribution::{ContinuousCDF, Normal};
    let u_auc = auc_scores(a, b)?;
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let u = u_auc * n1 * n2;
    let mut pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    pooled.sort_by(f64::total_cmp);
    let n = n1 + n2;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j + 1 < pooled.len() && pooled[j + 1] == pooled[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if !(var > 0.0) {
        return Ok(1.0);
    }
    let z = (u - n1 * n2 / 2.0).abs() / var.sqrt();
    let normal = Normal::standard();
    Ok((2.0 * (1.0 - normal.cdf(z))).min(1.0))
}

/// Live-versus-spoof AUC.
pub fn auc(records: &[ScoreRecord]) -> Result<f64> {
    let (live, spoof) = split_scores(records)?;
    auc_scores(&live, &spoof)
}

/// `(FAR, FRR)` at `threshold` with the rule "live iff score >= threshold".
fn far_frr(live: &[f64], spoof: &[f64], threshold: f64) -> (f64, f64) {
    let accepted = spoof.iter().filter(|&&s| s >= threshold).count();
    let rejected = live.iter().filter(|&&s| s < threshold).count();
    (
        accepted as f64 / spoof.len() as f64,
        rejected as f64 / live.len() as f64,
    )
}

/// Equal-error-rate threshold and the EER `(FAR + FRR) / 2` there.
///
/// Candidates are the midpoints between consecutive distinct scores plus the
/// lowest score itself; the first candidate (lowest threshold) minimizing
/// `|FAR - FRR|` wins.
pub fn eer_threshold(records: &[ScoreRecord]) -> Result<(f64, f64)> {
    let (live, spoof) = split_scores(records)?;
    let mut uniq: Vec<f64> = live.iter().chain(&spoof).copied().collect();
    uniq.sort_by(f64::total_cmp);
    uniq.dedup();
    let mut candidates = vec![uniq[0]];
    candidates.extend(uniq.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for t in candidates {
        let (far, frr) = far_frr(&live, &spoof, t);
        let gap = (far - frr).abs();
        if gap < best.0 {
            best = (gap, t, (far + frr) / 2.0);
        }
    }
    Ok((best.1, best.2))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationRates {
    pub threshold: f64,
    /// Worst attack type.
    pub apcer: f64,
    pub apcer_per_type: BTreeMap<String, f64>,
    pub bpcer: f64,
    pub acer: f64,
    pub hter: f64,
    pub counts: BTreeMap<String, usize>,
}

/// Error rates at a fixed threshold; a score equal to the threshold counts
/// as live.
pub fn classification_rates(records: &[ScoreRecord], threshold: f64) -> Result<ClassificationRates> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no score records".into()));
    }
    if !threshold.is_finite() {
        return Err(Error::InvalidArgument(format!("threshold {threshold} is not finite")));
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut accepted: BTreeMap<String, usize> = BTreeMap::new();
    let (mut n_live, mut live_rejected, mut n_spoof, mut spoof_accepted) = (0usize, 0usize, 0usize, 0usize);
    for r in records {
        if !r.score.is_finite() {
            return Err(Error::NonFinite(format!("score of `{}`", r.id)));
        }
        *counts.entry(r.label.clone()).or_default() += 1;
        let predicted_live = r.score >= threshold;
        if r.live {
            n_live += 1;
            live_rejected += usize::from(!predicted_live);
        } else {
            n_spoof += 1;
            spoof_accepted += usize::from(predicted_live);
            *accepted.entry(r.label.clone()).or_default() += usize::from(predicted_live);
        }
    }
    let apcer_per_type: BTreeMap<String, f64> = accepted
        .iter()
        .map(|(label, &a)| (label.clone(), a as f64 / counts[label] as f64))
        .collect();
    let apcer = apcer_per_type.values().copied().fold(0.0, f64::max);
    let bpcer = if n_live > 0 { live_rejected as f64 / n_live as f64 } else { 0.0 };
    let far = if n_spoof > 0 { spoof_accepted as f64 / n_spoof as f64 } else { 0.0 };
    Ok(ClassificationRates {
        threshold,
        apcer,
        apcer_per_type,
        bpcer,
        acer: (apcer + bpcer) / 2.0,
        hter: (far + bpcer) / 2.0,
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recs(live: &[f64], spoof: &[(&str, f64)]) -> Vec<ScoreRecord> {
        let mut out: Vec<ScoreRecord> = live
            .iter()
            .enumerate()
            .map(|(i, &s)| ScoreRecord::new(format!("l{i}"), "live", true, s))
            .collect();
        out.extend(
            spoof
                .iter()
                .enumerate()
                .map(|(i, &(t, s))| ScoreRecord::new(format!("s{i}"), t, false, s)),
        );
        out
    }

    #[test]
    fn auc_fixtures() {
        assert_eq!(auc(&recs(&[0.9, 0.8], &[("print", 0.1), ("print", 0.2)])).unwrap(), 1.0);
        assert_eq!(auc(&recs(&[0.5], &[("print", 0.5)])).unwrap(), 0.5);
        assert!(auc(&recs(&[0.5], &[])).is_err());
    }

    #[test]
    fn eer_fixtures() {
        let (t, eer) = eer_threshold(&recs(&[0.8, 0.9], &[("p", 0.1), ("p", 0.2)])).unwrap();
        assert!((t - 0.5).abs() < 1e-15);
        assert_eq!(eer, 0.0);
        let (t, eer) = eer_threshold(&recs(&[0.3, 0.3], &[("p", 0.3), ("p", 0.3)])).unwrap();
        assert_eq!((t, eer), (0.3, 0.5));
    }

    #[test]
    fn rates_hand_count() {
        let r = recs(
            &[0.7, 0.6, 0.4],
            &[("print", 0.6), ("print", 0.4), ("print", 0.3), ("replay", 0.2), ("replay", 0.8)],
        );
        let cr = classification_rates(&r, 0.5).unwrap();
        assert_eq!(cr.apcer_per_type["print"], 1.0 / 3.0);
        assert_eq!(cr.apcer_per_type["replay"], 0.5);
        assert_eq!(cr.apcer, 0.5);
        assert_eq!(cr.bpcer, 1.0 / 3.0);
        assert!((cr.acer - 5.0 / 12.0).abs() < 1e-15);
        assert!((cr.hter - 11.0 / 30.0).abs() < 1e-15);
        let zero = classification_rates(&r, 0.0).unwrap();
        assert_eq!((zero.apcer, zero.bpcer), (1.0, 0.0));
    }

    #[test]
    fn mann_whitney_reference() {
        // scipy.stats.mannwhitneyu(a, b, use_continuity=False, method="asymptotic")
        let a = [1.1, 2.3, 3.8, 4.0, 5.5];
        let b = [0.2, 0.9, 1.7, 2.0, 3.1, 3.3];
        let p = mann_whitney_p(&a, &b).unwrap();
        assert!((p - 0.100348).abs() < 1e-5, "{p}");
        assert_eq!(mann_whitney_p(&[1.0, 1.0], &[1.0]).unwrap(), 1.0);
    }

    #[test]
    fn tie_counts_as_live() {
        let r = recs(&[0.5], &[("print", 0.5)]);
        let cr = classification_rates(&r, 0.5).unwrap();
        assert_eq!((cr.apcer, cr.bpcer), (1.0, 0.0));
    }
}
